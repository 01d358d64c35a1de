"""Compositional chart question answering.

``chartreason`` compiles a natural-language chart question into a small typed
operator DAG, assembles an attention network whose blocks mirror that DAG, and
decodes a short textual answer.  Sub-modules:

- :mod:`chartreason.graph` -- the operator-DAG IR and its JSON/DOT codecs
- :mod:`chartreason.templates` -- template rules that compile questions to DAGs
- :mod:`chartreason.autodiff` -- numpy tensor tape, ops, optimizer, gradcheck
- :mod:`chartreason.charts` -- chart tables, feature files, the chart encoder
- :mod:`chartreason.reasoning` -- DAG-shaped network assembly and execution
- :mod:`chartreason.decoding` -- vocabulary, tokenizer, answer decoder
- :mod:`chartreason.synth` -- synthetic chart/question corpus generator
- :mod:`chartreason.harness` -- training, evaluation, ablations, checkpoints
- :mod:`chartreason.cli` -- command-line front end
"""

__version__ = "0.1.0"
