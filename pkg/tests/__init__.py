"""Test package for DeMT."""
