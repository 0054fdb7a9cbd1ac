"""Jets, Whitney fields and higher-order paratangent bundles on sampled closed sets."""

__version__ = "0.1.0"
