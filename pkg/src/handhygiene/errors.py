class HandHygieneError(Exception):
    """Base class for pipeline errors."""


class ConfigError(HandHygieneError, ValueError):
    pass


class IngestError(HandHygieneError):
    pass


class LabelingError(HandHygieneError):
    def __init__(self, count: int, session: str | None = None):
        self.count = count
        self.session = session
        where = f" in session {session!r}" if session else ""
        super().__init__(f"expected 6 activity segments{where}, found {count}")


class ManifestError(HandHygieneError):
    pass


class SplitError(HandHygieneError):
    pass


class PreprocessError(HandHygieneError, ValueError):
    pass


class EncodingError(HandHygieneError, ValueError):
    pass


class ModelLoadError(HandHygieneError):
    pass


class ShapeError(HandHygieneError, ValueError):
    pass


class LossError(HandHygieneError, ValueError):
    pass


class TrainingError(HandHygieneError):
    pass


class ExportError(HandHygieneError):
    pass


class EvaluationError(HandHygieneError, ValueError):
    pass
