"""Desk-scale lab for knowledge-injected dual-head meme classification.

Subpackages by role: numcore (autodiff engine), knowledge_format
(entity/knowledge markup), dataset (samples, tokens, synthetic data),
provider (knowledge sources), model (dual-head transformer), train,
infer (template decoding), metrics, ablation, cli.
"""

__version__ = "0.1.0"
