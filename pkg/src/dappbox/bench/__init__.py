"""Benchmark harness: isolation, control-loop latency and footprint scenarios."""
