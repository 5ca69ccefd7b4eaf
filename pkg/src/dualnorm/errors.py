class ConfigurationError(ValueError):
    """Invalid or inconsistent layer/model/experiment configuration."""


class NumericalError(ArithmeticError):
    """Non-finite values or invalid numeric inputs encountered."""
