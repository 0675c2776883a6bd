"""
A few training steps by hand
============================

``run_training`` wraps everything below. Doing it manually shows the pieces:
prefill the vocabularies from teacher features, cut the multi-crop views,
then take optimization steps while the teacher follows the student.
"""

# %%
from obow import TrainConfig, TrainState, make_shapes_dataset
from obow.trainer import epoch_batches, make_batch, prefill_vocabularies, train_step

data = make_shapes_dataset(n_images=64, size=64, seed=0)
config = TrainConfig(stage_widths=(16, 32, 64), vocab_size=64, batch_size=16, epochs=1, output_dir="runs/walkthrough")
state = TrainState(config)
state.total_steps = 4

# %%
# Before the first step every vocabulary is filled from teacher features of
# center crops, so targets are defined from step zero.
n_batches = prefill_vocabularies(state, data)
print("prefill batches:", n_batches, {lv: len(v) for lv, v in state.vocabs.items()})

# %%
# Each image yields one teacher view (56 px), two primary crops (40 px) and
# five of the nine grid patches (24 px).
batch = make_batch(data, epoch_batches(config, len(data), 0)[0], config, epoch=0)
print([tuple(v.shape) for v in [batch[0].teacher_view, *batch[0].student_views]])

# %%
# Four steps. The loss starts near log(K) and the teacher momentum climbs
# toward one along its cosine schedule.
for i in range(4):
    rec = train_step(state, make_batch(data, epoch_batches(config, len(data), 0)[i], config, epoch=0))
    print(rec["step"], round(rec["loss"], 4), round(rec["alpha"], 5), {k: round(v, 4) for k, v in rec["delta"].items()})
