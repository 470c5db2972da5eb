"""Exception hierarchy shared by every stage of the pipeline."""


class ForgetsubError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class EmptyReference(ForgetsubError):
    pass


class EmptySubset(ForgetsubError):
    pass


class IndexOutOfRange(ForgetsubError):
    pass


class DuplicateId(ForgetsubError):
    pass


class MalformedRecord(ForgetsubError):
    def __init__(self, path, line_no, reason):
        self.path = str(path)
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"{self.path}:{line_no}: {reason}")


class UnknownSample(ForgetsubError):
    pass


class IncompleteRun(ForgetsubError):
    def __init__(self, missing):
        # missing: {run description: [sample ids]}
        self.missing = dict(missing)
        parts = [f"{run}: missing {', '.join(ids[:10])}{' ...' if len(ids) > 10 else ''}"
                 for run, ids in self.missing.items()]
        super().__init__("incomplete run(s): " + "; ".join(parts))


class DimensionMismatch(ForgetsubError):
    pass


class EmptyPool(ForgetsubError):
    pass


class InsufficientSamples(ForgetsubError):
    pass


class DegenerateInput(ForgetsubError):
    pass


class ConfigInvalid(ForgetsubError):
    pass


class InsufficientCorrectSamples(ForgetsubError):
    pass


class TrajectoryTooShort(ForgetsubError):
    pass


class KeyMismatch(ForgetsubError):
    pass


class CacheFormatError(ForgetsubError):
    pass
