"""Scenario runner, map/recording I/O, metrics and the CLI."""
