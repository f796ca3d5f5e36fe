"""oodgate: streaming rest/task gating and out-of-distribution rejection for
multichannel biosignal streams."""

__version__ = "0.1.0"
