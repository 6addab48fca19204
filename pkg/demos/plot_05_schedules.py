"""
Learning rate, momentum and batch size over training
====================================================

Growing the batch mid-training while lowering momentum keeps the SGD
noise scale constant.
"""

from torus2d.largebatch import PRESET_SCHEDULES, lr_config_a, lr_config_b, noise_scale_b

schedule = PRESET_SCHEDULES["exp2"]
print(f"{'epoch':>5} {'lr':>7} {'momentum':>8} {'batch':>6}")
for row in schedule.table(epoch_step=10):
    print(f"{row['epoch']:5.0f} {row['lr']:7.3f} {row['momentum']:8.4f} {row['total_batch']:6d}")

# Two discontinuities are kept as written: warmup end and the base switch.
for e in (4.999, 5.0, 29.999, 30.0):
    print(f"lr_b({e}) = {lr_config_b(e):.3f}")

print("lr_a at 0, 34, 62:", lr_config_a(0), lr_config_a(34), lr_config_a(62))
print("noise scale at epoch 0:", round(noise_scale_b(0), 2))
