"""Regenerate the planted-groups and single-user fixtures under src/tdm/fixtures.

    python3 scripts/make_fixtures.py
"""

import csv
import json
from pathlib import Path

import numpy as np

from tdm.analysis import planted_groups_tensor
from tdm.dimension import format_timestamp

EVENTS, SEED = 80.0, 11
ROOT = Path(__file__).resolve().parents[1] / "src" / "tdm" / "fixtures"


def _events(t, rng, n_chatter=300):
    """One JSON event per retweet; non-viral chatter is filtered by the schema."""
    users, tags, hours = t.dims
    out = []
    for (u, h, k), count in sorted(t._data.items(), key=lambda e: (e[0][2], e[0][0], e[0][1])):
        for _ in range(count):
            minute = int(rng.integers(60))
            out.append({
                "user": users.key_of(u + 1),
                "hashtags": [tags.key_of(h + 1)],
                "created_at": format_timestamp(hours.key_of(k + 1) + 60 * minute),
                "retweet_count": int(rng.integers(1000, 5000)),
            })
    for _ in range(n_chatter):
        out.append({
            "user": users.key_of(int(rng.integers(users.size)) + 1),
            "hashtags": [tags.key_of(int(rng.integers(tags.size)) + 1)],
            "created_at": format_timestamp(hours.key_of(int(rng.integers(hours.size)) + 1)),
            "retweet_count": int(rng.integers(0, 1000)),
        })
    # a time-ordered stream; chatter lands among the events of its hour
    out.sort(key=lambda e: e["created_at"])
    return out


def _schema(pipelines):
    return {
        "adapters": [
            {"id": "accounts", "kind": "csv", "config": {"path": "users.csv"}},
            {"id": "retweets", "kind": "jsonlines", "config": {"path": "retweets.jsonl"}},
        ],
        "dimensions": [
            {"name": "user", "key_type": "string", "alias": "U",
             "binding": {"adapter": "accounts", "query": {"select": ["user"]}}},
            {"name": "hashtag", "key_type": "string", "alias": "H",
             "binding": {"adapter": "retweets",
                         "query": {"explode": "hashtags", "where": {"retweet_count": {">=": 1000}},
                                   "select": ["hashtags"]}}},
            {"name": "time", "key_type": "timestamp", "granularity": "hour", "alias": "T",
             "binding": {"adapter": "retweets",
                         "query": {"where": {"retweet_count": {">=": 1000}}, "select": ["created_at"]}}},
        ],
        "tensors": [
            {"name": "retweets", "dimensions": ["user", "hashtag", "time"],
             "value_type": "integer", "default": 0, "merge": "sum",
             "values": {"adapter": "retweets",
                        "query": {"explode": "hashtags",
                                  "where": {"retweet_count": {">=": 1000}},
                                  "group_by": ["user", "hashtags", "created_at"],
                                  "aggregate": {"op": "count"}}}},
        ],
        "pipelines": pipelines,
    }


def write_fixture(name, t, truth, pipelines, seed):
    d = ROOT / name
    d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    users = t.dims[0]
    with open(d / "users.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user"])
        for u in users.keys:
            w.writerow([u])
    if truth is not None:
        with open(d / "truth.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user", "group"])
            for u, g in zip(users.keys, truth):
                w.writerow([u, int(g)])
    chatter = 300 if users.size > 1 else 5
    with open(d / "retweets.jsonl", "w") as fh:
        for e in _events(t, rng, chatter):
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    (d / "schema.json").write_text(json.dumps(_schema(pipelines), indent=2) + "\n")


def main():
    t, truth = planted_groups_tensor(n_users=60, n_hashtags=12, n_hours=96, events_per_user=EVENTS,
                                     noise_events=2.0, seed=SEED)
    write_fixture("planted", t, truth, [
        {"name": "groups", "tensor": "retweets", "user_mode": "user", "k": 3,
         "rank_range": [1, 2, 3, 4, 5, 6], "seed": 0, "truth": "truth.csv",
         "breakout": {"time_mode": "time", "window": 3600, "min_segment": 24}},
        {"name": "rank8_k4", "tensor": "retweets", "user_mode": "user", "k": 4, "rank": 8,
         "seed": 0, "breakout": {"time_mode": "time", "window": 14400, "min_segment": 6}},
    ], seed=12)
    single, _ = planted_groups_tensor(n_users=1, n_hashtags=6, n_hours=48, n_groups=1,
                                      events_per_user=30.0, noise_events=1.0, seed=13)
    write_fixture("single", single, None, [
        {"name": "single", "tensor": "retweets", "user_mode": "user", "k": 3, "rank": 2, "seed": 0},
    ], seed=14)


if __name__ == "__main__":
    main()
