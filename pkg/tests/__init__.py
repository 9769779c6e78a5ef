"""Test suite for pglab."""
