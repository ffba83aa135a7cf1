"""Puts the repo root on sys.path so pytest can import the flat modules the same way unittest does."""
