"""Parameter-efficient self-supervised adaptation of small Vision Transformers.

Modules, bottom-up: ``tensor`` (autodiff), ``optim`` (AdamW), ``vit``
(backbone), ``peft`` (trainability regimes), ``ssl`` (self-distillation),
``pipeline`` (stages), ``evaluation`` (k-NN and metrics), ``data``
(synthetic domains and the ESDS format), ``checkpoint`` (ESCK format),
``config`` and ``cli``.
"""

__version__ = "0.1.0"
