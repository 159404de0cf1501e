class SynthPanelError(Exception):
    """Root of every error raised by synthpanel."""
