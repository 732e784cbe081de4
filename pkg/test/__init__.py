"""Tests for the cascade search toolkit."""
