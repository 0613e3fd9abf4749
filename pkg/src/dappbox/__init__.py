"""dappbox: a sandboxed host for spectrum-sensing dApps next to a radio agent."""

__version__ = "0.1.0"
