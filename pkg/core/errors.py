class DasnetError(Exception):
    exit_code = 2

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ConfigurationError(DasnetError):
    exit_code = 1


class NumericError(DasnetError):
    def __init__(self, operator: str, detail: str = "non-finite output"):
        super().__init__(f"{operator}: {detail}")
        self.operator = operator


class InternalError(DasnetError):
    pass


class DatasetLoadError(DasnetError):
    def __init__(self, record: str, detail: str):
        super().__init__(f"record {record}: {detail}")
        self.record = record


class TrainingDivergedError(DasnetError):
    def __init__(self, batch_index: int, detail: str):
        super().__init__(f"training diverged at batch {batch_index}: {detail}")
        self.batch_index = batch_index


class AcceptanceError(DasnetError):
    exit_code = 3
