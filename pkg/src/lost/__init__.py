"""Training linear layers as a mix of an activated low-rank pair and a
channel-sparse block, plus a small byte-level decoder LM to exercise them.

Submodules are imported explicitly (``from lost import model``); this file
stays import-light so the CLI can pin thread environment variables before
numpy loads.
"""

__version__ = "0.1.0"
