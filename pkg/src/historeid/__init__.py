"""Patient re-identification pipeline for histopathology slides.

Subpackages cover the full workflow: cohort manifests and splits
(:mod:`historeid.dataset`), a synthetic cohort generator
(:mod:`historeid.synthetic`), tissue masking and patch extraction
(:mod:`historeid.tiling`), stain deconvolution and augmentation
(:mod:`historeid.stain`), patch and attention-MIL classifiers
(:mod:`historeid.models`), retrieval metrics and experiment runners
(:mod:`historeid.metrics`, :mod:`historeid.experiments`), latent-anchor
analysis (:mod:`historeid.latent`), and a publication risk assessment
rule engine (:mod:`historeid.risk`).
"""

__version__ = "0.1.0"
