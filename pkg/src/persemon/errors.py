class ConfigError(ValueError):
    """A configuration or dataset/config combination is invalid."""


class ContractError(ValueError):
    """An operation was called outside its precondition."""
