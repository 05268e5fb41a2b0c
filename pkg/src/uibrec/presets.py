"""Method registry and the per-dataset hyperparameter presets."""
from __future__ import annotations

# method name -> (scorer kind, loss family)
METHODS = {
    "bpr": ("mf", "pairwise-lnsig"),
    "bpr-uib": ("mf", "uib-lnsig"),
    "ncf": ("mlp", "pointwise-ce"),
    "ncf-uib": ("mlp", "uib-lnsig"),
    "sml": ("metric", "sml"),
    "sml-uib": ("metric", "sml-uib"),
    "lightgcn": ("gcn", "pairwise-lnsig"),
    "lightgcn-uib": ("gcn", "uib-lnsig"),
}

DATASETS = ("ml10m", "ml1m", "aiv", "lastfm")

# lr, tau (embedding L2), alpha, lam, gamma, upsilon (LightGCN weight decay)
PRESETS: dict[str, dict[str, dict[str, float]]] = {
    "bpr": {
        "ml10m": {"lr": 1.0, "tau": 0.0},
        "ml1m": {"lr": 1.0, "tau": 0.1},
        "aiv": {"lr": 3.0, "tau": 0.3},
        "lastfm": {"lr": 1.0, "tau": 0.2},
    },
    "bpr-uib": {
        "ml10m": {"lr": 3.0, "tau": 0.1, "alpha": 8.0},
        "ml1m": {"lr": 1.0, "tau": 0.1, "alpha": 8.0},
        "aiv": {"lr": 3.0, "tau": 0.2, "alpha": 1.0},
        "lastfm": {"lr": 3.0, "tau": 0.2, "alpha": 2.0},
    },
    "ncf": {
        "ml10m": {"lr": 1.0, "tau": 0.1},
        "ml1m": {"lr": 1.0, "tau": 0.1},
        "aiv": {"lr": 1.0, "tau": 0.4},
        "lastfm": {"lr": 1.0, "tau": 0.3},
    },
    "ncf-uib": {
        "ml10m": {"lr": 1.0, "tau": 0.1, "alpha": 8.0},
        "ml1m": {"lr": 1.0, "tau": 0.1, "alpha": 8.0},
        "aiv": {"lr": 1.0, "tau": 0.4, "alpha": 0.1},
        "lastfm": {"lr": 1.0, "tau": 0.4, "alpha": 8.0},
    },
    "sml": {
        "ml10m": {"lr": 0.1, "tau": 0.0, "lam": 0.3, "gamma": 64.0},
        "ml1m": {"lr": 1.0, "tau": 0.0, "lam": 0.3, "gamma": 128.0},
        "aiv": {"lr": 1.0, "tau": 0.0, "lam": 0.3, "gamma": 256.0},
        "lastfm": {"lr": 1.0, "tau": 0.0, "lam": 0.3, "gamma": 128.0},
    },
    "sml-uib": {
        "ml10m": {"lr": 0.1, "tau": 0.0, "lam": 0.3, "gamma": 64.0, "alpha": 0.2},
        "ml1m": {"lr": 1.0, "tau": 0.0, "lam": 0.3, "gamma": 128.0, "alpha": 0.2},
        "aiv": {"lr": 0.3, "tau": 0.0, "lam": 0.3, "gamma": 256.0, "alpha": 0.2},
        "lastfm": {"lr": 0.3, "tau": 0.0, "lam": 0.3, "gamma": 256.0, "alpha": 2.0},
    },
    "lightgcn": {
        "ml10m": {"lr": 0.1, "tau": 0.0, "upsilon": 1e-4},
        "ml1m": {"lr": 0.1, "tau": 0.0, "upsilon": 1e-4},
        "aiv": {"lr": 0.03, "tau": 0.0, "upsilon": 1e-4},
        "lastfm": {"lr": 0.1, "tau": 0.0, "upsilon": 1e-4},
    },
    "lightgcn-uib": {
        "ml10m": {"lr": 0.3, "tau": 0.0, "upsilon": 1e-4, "alpha": 8.0},
        "ml1m": {"lr": 0.3, "tau": 0.0, "upsilon": 1e-4, "alpha": 8.0},
        "aiv": {"lr": 0.03, "tau": 0.0, "upsilon": 1e-4, "alpha": 8.0},
        "lastfm": {"lr": 0.1, "tau": 0.0, "upsilon": 1e-4, "alpha": 0.2},
    },
}

ALPHA_GRID = (0.1, 0.2, 1.0, 2.0, 4.0, 8.0, 16.0)
MAX_EPOCHS = {"ml10m": 100, "ml1m": 500, "aiv": 500, "lastfm": 500}


def preset(method: str, dataset: str) -> dict[str, float]:
    try:
        return dict(PRESETS[method][dataset])
    except KeyError:
        raise KeyError(f"no preset for method={method!r} dataset={dataset!r}") from None
