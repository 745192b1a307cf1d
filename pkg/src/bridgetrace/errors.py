"""Errors shared by the model modules and the CLI exit-code mapping."""


class DataError(Exception):
    """Input data is missing, empty or inconsistent."""


class ModelError(Exception):
    """A model is missing, unloaded or of the wrong kind."""
