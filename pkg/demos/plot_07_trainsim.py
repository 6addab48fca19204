"""
Distributed SGD equals large-batch SGD
======================================

Four workers average their shard gradients with a torus all-reduce. The
parameters track a single process stepping on the combined batch.
"""

from torus2d.trainsim import TrainSimSpec, run_trainsim

for optimizer, eps in (("sgd", 0.0), ("lars", 0.1)):
    spec = TrainSimSpec(workers=4, per_worker_batch=8, steps=50, optimizer=optimizer,
                        label_smoothing=eps, lr=0.1 if optimizer == "sgd" else 2.0)
    report = run_trainsim(spec)
    print(f"{optimizer:4s} eps={eps}: max rel divergence {report.max_rel_divergence:.1e}, "
          f"final loss {report.final_loss_distributed:.4f}")
