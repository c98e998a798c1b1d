"""Forward-pass-only training of recurrent networks with central-difference random gradient estimation."""
__version__ = "0.1.0"
