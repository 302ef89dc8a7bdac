"""Learned corrections to incomplete Cholesky preconditioners."""
