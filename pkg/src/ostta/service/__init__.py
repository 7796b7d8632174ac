"""HTTP service exposing sessions and whole-experiment runs."""
