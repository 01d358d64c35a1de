"""
The ablation grid
=================

How much does graph guidance buy?  The grid trains five variants that
differ only in whether the parsed graph steers computation and how many
operator types the reasoning stage distinguishes.  At demo scale nothing
generalizes to held-out charts, so each variant is scored on its own
training questions; what the table shows is how fast each wiring fits.
"""

import tempfile

from chartreason.harness import (
    RunConfig,
    ablate,
    format_ablation_table,
    ablation_grid_variants,
)
from chartreason.reasoning import ModelConfig
from chartreason.synth import CorpusConfig, gen_corpus
from chartreason.templates import load_default_rules

rules = load_default_rules()
triples = gen_corpus(CorpusConfig(n_charts=5, questions_per_chart=4, seed=1), rules)

base = ModelConfig(d=32, heads=2, self_data_layers=1, op_layers=1)
# exact matching (tol 0) so partially-fit numeric answers count as misses
run = RunConfig(model=base, steps=180, lr=2e-3, batch_size=2, seed=0,
                warmup_steps=20, lr_floor=0.1, tol=0.0,
                ckpt=tempfile.mktemp(suffix=".ckpt"))

report = ablate(run, ablation_grid_variants(base), triples, triples,
                log=lambda row: print(f"  finished {row.name} ({row.status})"))
print()
print(format_ablation_table(report))
