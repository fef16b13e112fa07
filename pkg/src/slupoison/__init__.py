"""Dirty- and clean-label backdoor poisoning of a small spoken-command model.

Modules: ``signal`` (waveforms, triggers, SNR), ``dataset`` (synthetic corpus,
manifests), ``model`` (classifier with hand-written gradients), ``attack``
(poison selection and crafting), ``defense`` (detector filter, denoiser),
``evaluation`` (metrics, sweeps, reports) and ``cli``.
"""

__version__ = "0.1.0"
