"""Exception hierarchy. Every domain error derives from DasgilError so the CLI can map it to exit code 1."""


class DasgilError(Exception):
    pass


class DasgilIOError(DasgilError, OSError):
    pass


class MissingFile(DasgilIOError):
    pass


class MalformedRecord(DasgilError):
    def __init__(self, line, reason=""):
        self.line = line
        super().__init__(f"malformed record at line {line}: {reason}")


class DuplicateId(DasgilError):
    def __init__(self, record_id):
        self.record_id = record_id
        super().__init__(f"duplicate record id {record_id!r}")


class VirtualMissingGroundTruth(DasgilError):
    def __init__(self, record_id):
        self.record_id = record_id
        super().__init__(f"virtual record {record_id!r} lacks depth/seg ground truth")


class ClassOutOfRange(DasgilError):
    pass


class InvalidConfig(DasgilError):
    pass


class NoValidPositive(DasgilError):
    pass


class DimensionMismatch(DasgilError):
    pass


class TargetTooLarge(DasgilError):
    pass


class ShapeMismatch(DasgilError):
    pass


class LayerOutOfRange(DasgilError):
    pass


class NoValidPixels(DasgilError):
    pass


class EmptyBatch(DasgilError):
    pass


class NonFiniteInput(DasgilError):
    pass


class NonFiniteLoss(DasgilError):
    pass


class EmptyDomain(DasgilError):
    pass


class VersionMismatch(DasgilError):
    pass


class LayerMismatch(DasgilError):
    pass


class EmptyDatabase(DasgilError):
    pass


class TooFewChannels(DasgilError):
    pass


class NonUnitQuaternion(DasgilError):
    pass


class EmptyQuerySet(DasgilError):
    pass


class InvalidReport(DasgilError):
    pass
