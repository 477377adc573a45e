"""Bundled latency maps (region x region round-trip times in ms)."""
