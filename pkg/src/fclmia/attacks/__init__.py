"""Passive and active membership inference attacks."""
