"""Text-prompted, modality-aware lesion segmentation on a small autodiff core.

Submodules: ``tensor`` (tape autodiff), ``affm`` (feature fusion),
``modality`` (modality signature), ``losses``, ``boxes``, ``data``,
``model`` / ``pipeline`` / ``train`` (assembly, inference, training) and
``cli``.
"""
__version__ = "0.1.0"
