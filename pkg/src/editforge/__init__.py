"""editforge: desk-scale instruction-editing engine.

Toy guided diffusion with decoupled text/visual cross-attention and
task-routed experts, plus the dataset machinery around it: instruction
generation, quality filtering, mask algebra, and a batch CLI.
"""

__version__ = "0.1.0"
