"""Figure regeneration for cavflow sweeps."""
