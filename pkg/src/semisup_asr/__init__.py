"""Semi-supervised speech recognition at desk scale.

Conformer encoders, contrastive pre-training on masked subsampled features,
transducer fine-tuning with SpecAugment, LM shallow fusion and the
noisy-student generation loop, all on a small numpy autodiff core.
"""

__version__ = "0.1.0"
