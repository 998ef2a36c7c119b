"""Output-feedback robust MPC for norm-bounded uncertain linear systems."""

__version__ = "0.1.0"
