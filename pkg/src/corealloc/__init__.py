"""CPU core allocation for microservices with soft actor-critic."""

__version__ = "0.1.0"
