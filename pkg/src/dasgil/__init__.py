"""Domain-adaptive multi-task place recognition: depth and segmentation supervision from
synthetic images, least-squares adversarial feature alignment to the real domain, and
multi-level descriptor retrieval."""

__version__ = "0.1.0"
