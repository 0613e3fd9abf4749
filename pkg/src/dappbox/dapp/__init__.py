"""The spectrum-sensing dApp: Python reference pipeline and runners for its compiled builds."""
