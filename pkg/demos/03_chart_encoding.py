"""
Charts as token sequences
=========================

A chart is a small table plus presentation metadata.  The encoder
linearizes it into tokens, embeds them, and runs self-attention so every
position can see the whole table.
"""

from chartreason.autodiff import ParamStore
from chartreason.charts import ChartEncoder, ChartSpec, spec_tokens
from chartreason.decoding import Vocab

chart = ChartSpec(
    title="rainfall by year",
    x_label="year",
    y_label="rainfall",
    series_names=["p1", "p2"],
    category_names=["2011", "2012", "2013"],
    values=[[4.0, 7.0, 2.0], [9.0, 1.0, 6.0]],
    legend_pos="top left",
)

tokens = spec_tokens(chart)
print("surface token count:", len(tokens))
print("first 18 tokens:", tokens[:18])

vocab = Vocab.build(tokens)
encoder = ChartEncoder(vocab, d=32, heads=2, store=ParamStore(seed=0))

# numbers split digit-wise at the vocabulary level, so the encoded
# sequence is a bit longer than the surface token stream
ids = encoder.token_ids(chart)
c_v = encoder.encode(chart)
print("vocabulary ids:", len(ids))
print("encoded shape:", c_v.shape, "(one row per id)")
