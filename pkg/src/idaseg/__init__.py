"""Unsupervised cross-domain vessel segmentation.

Adapts a segmentation model trained on a labeled source domain (e.g. retinal
fundus images) to an unlabeled target domain by synthesizing intermediate
images that mix content from both domains, aligning features against
class prototypes updated from those intermediates, and self-training a
student against an EMA teacher.
"""

__version__ = "0.1.0"
