"""Exception hierarchy shared across the package."""


class AttrNetError(Exception):
    """Base class for all errors raised by attrnet."""


class DimensionError(AttrNetError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(AttrNetError, ValueError):
    """Invalid configuration: unknown scheme, bad grouping, infeasible plan."""


class ContractError(AttrNetError, RuntimeError):
    """An operation was called out of order or without required state."""


class DataError(AttrNetError, ValueError):
    """Malformed or inconsistent dataset contents."""


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class CheckpointError(AttrNetError, ValueError):
    """Checkpoint file is corrupt or does not match the expected topology."""


class DivergenceError(AttrNetError, FloatingPointError):
    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch}, batch {batch} (loss={loss})")
