"""Multi-agent multi-disciplinary consultation engine."""
