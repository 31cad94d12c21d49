"""Cloud volume reconstruction from sparse posed depth maps."""
