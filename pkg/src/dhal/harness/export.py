"""CSV exports for external plotting."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from dhal import dha as dha_mod
from dhal.mcppo.policy import policy_input
from dhal.mcppo.train import Learner, read_metrics


def _cell(value) -> str:
    if isinstance(value, (list, tuple)):
        return ";".join(_cell(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def rows_to_csv(rows: list[dict], first: tuple = ()) -> str:
    keys = sorted({k for r in rows for k in r} - set(first))
    header = [k for k in first if any(k in r for r in rows)] + keys
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([_cell(r.get(k)) for k in header])
    return buf.getvalue()


def columns_to_csv(columns: dict) -> str:
    names = list(columns)
    arrays = [np.asarray(columns[n]) for n in names]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(names)
    for row in zip(*arrays):
        writer.writerow([_cell(v.item() if hasattr(v, "item") else v) for v in row])
    return buf.getvalue()


def export_metrics(metrics_path, out_path) -> int:
    """One CSV row per logged iteration; returns the row count."""
    rows = read_metrics(metrics_path)
    Path(out_path).write_text(rows_to_csv(rows, first=("iter",)))
    return len(rows)


def hidden_activation_dump(learner: Learner, steps: int) -> dict:
    """Roll the deterministic policy and record the actor's last hidden layer.

    One row per (step, env) with the predicted mode (1-based) alongside, so an
    external tool can embed the activations and colour them by mode.
    """
    cols: dict[str, list] = {"step": [], "env": [], "mode": [], "true_mode": []}
    hidden_rows = []
    for t in range(steps):
        windows = learner.history.windows()
        belief, _, z = dha_mod.predict_next(learner.dha, windows, deterministic=True)
        x = policy_input(z.data, learner.obs, learner.prev_action)
        dist, hidden = learner.ac.distribution(x, return_hidden=True)
        action = dist.mode()
        new_obs = np.zeros_like(learner.obs)
        dones = np.zeros(len(learner.envs), dtype=bool)
        for i, env in enumerate(learner.envs):
            cols["step"].append(t)
            cols["env"].append(i)
            cols["mode"].append(int(belief.index[i]) + 1)
            cols["true_mode"].append(int(env.state.true_mode) + 1)
            res = env.step(action[i])
            dones[i] = res.done
            new_obs[i] = env.reset() if res.done else res.obs
        hidden_rows.append(hidden.data.astype(np.float64))
        learner.prev_action = np.where(dones[:, None], 0.0, action)
        learner.obs = new_obs
        learner.history.push(new_obs, learner.prev_action)
        if dones.any():
            learner.history.reset(np.flatnonzero(dones), new_obs[dones])
    h = np.concatenate(hidden_rows)
    out = {k: np.asarray(v) for k, v in cols.items()}
    for j in range(h.shape[1]):
        out[f"h{j}"] = h[:, j]
    return out
