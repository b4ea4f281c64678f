"""Configuration, evaluation, export and the ``dhal`` command line."""
