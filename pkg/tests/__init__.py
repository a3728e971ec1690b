"""Tests for the SpinTouch integration."""
