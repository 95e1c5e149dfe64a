"""Packaged scenario files, loadable by name."""
