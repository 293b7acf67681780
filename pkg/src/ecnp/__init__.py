"""Evidential conditional neural processes on a small numpy autodiff tape."""
