"""Sensor and task toy language models that talk in machine tokens over a simulated radio link."""
