# coding: utf-8

# # The pruning schedule on scripted shares
#
# No training here: we feed the schedule hand-written share vectors and watch
# which experts go. Eight experts, 800 steps, windows of 100 steps, and the
# final decision at step 400.

# In[1]:

import numpy as np

from moeprune.pruning import (ProficiencyLedger, PruneConfig, ScheduleState, expected_decision_steps,
                              threshold)

print("T(beta=1, Z=8) =", threshold(1.0, 8))
print("T(beta=1, Z=32) =", threshold(1.0, 32))


# One expert is a clear favourite, two are middling, the rest are rare.

# In[2]:

base = np.array([0.40, 0.20, 0.15, 0.10, 0.06, 0.04, 0.03, 0.02])


def run(mode, beta=1.0):
    cfg = PruneConfig(mode=mode, beta=beta, total_steps=800, num_experts=8)
    state = ScheduleState.start(cfg, [0])
    ledger = ProficiencyLedger([0], 8)
    for step in expected_decision_steps(cfg):
        alive = np.isin(np.arange(8), state.survivors[0])
        ledger.alpha_sum[0] = base * alive * 1000
        ledger.hit_count[0] = np.round(base * alive * 1000).astype(np.int64)
        ledger.token_count[0] = int(ledger.hit_count[0].sum())
        for ev in state.on_window_end(ledger, step):
            print(f"  step {step:>3} {ev.kind:<6} dropped {ev.dropped} -> {state.survivors[0]}")
    return state


# Eager: everything below beta / Z goes at once, then again as Z shrinks.

# In[3]:

print("eager")
run("eager")


# Staged: one expert per window; the midpoint force drop finishes the job.

# In[4]:

print("staged")
run("staged")


# beta = 0 never fires the threshold, so the midpoint decides everything.

# In[5]:

print("eager, beta = 0")
run("eager", beta=0.0)
