"""Read and write MDPs in the pglab YAML document format.

The document carries ``n_states``, ``n_actions``, ``gamma``, the reward and
transition tensors flattened in row-major order, and the MDP fingerprint,
which is checked on load when present. Floats are written with 17
significant digits so a load reproduces the MDP exactly.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from pglab.files import atomic_write_text
from pglab.mdp import TabularMdp, mdp_fingerprint, validate_mdp

logger = logging.getLogger(__name__)

FORMAT_NAME = "pglab-mdp"
FORMAT_VERSION = 1

_Loader = getattr(yaml, "CSafeLoader", yaml.SafeLoader)


class _MdpDumper(yaml.SafeDumper):
    """Safe dumper that writes every float in exponent form with 17 digits."""


def _represent_float(dumper: yaml.SafeDumper, value: float) -> yaml.ScalarNode:
    return dumper.represent_scalar("tag:yaml.org,2002:float", format(value, ".16e"))


_MdpDumper.add_representer(float, _represent_float)


def mdp_to_dict(mdp: TabularMdp) -> dict[str, Any]:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.gamma,
        "reward": mdp.reward.ravel().tolist(),
        "transition": mdp.transition.ravel().tolist(),
        "fingerprint": mdp_fingerprint(mdp),
    }


def mdp_from_dict(data: dict[str, Any]) -> TabularMdp:
    """Build and validate an MDP from a parsed document.

    Raises:
        ValueError: If fields are missing, have the wrong size, or the stored
            fingerprint does not match the tensors.
        MdpValidationError: If the MDP violates its invariants.
    """
    required = ("n_states", "n_actions", "gamma", "reward", "transition")
    missing = [key for key in required if key not in data]
    if missing:
        raise ValueError(f"MDP document is missing fields: {', '.join(missing)}")
    if data.get("format", FORMAT_NAME) != FORMAT_NAME:
        raise ValueError(f"Unsupported MDP document format: {data['format']!r}")

    n_states = int(data["n_states"])
    n_actions = int(data["n_actions"])
    reward = np.asarray(data["reward"], dtype=np.float64)
    transition = np.asarray(data["transition"], dtype=np.float64)
    if reward.size != n_states * n_actions:
        raise ValueError(f"reward has {reward.size} entries, expected {n_states * n_actions}")
    if transition.size != n_states * n_actions * n_states:
        raise ValueError(
            f"transition has {transition.size} entries, "
            f"expected {n_states * n_actions * n_states}"
        )

    mdp = TabularMdp(
        transition.reshape(n_states, n_actions, n_states),
        reward.reshape(n_states, n_actions),
        float(data["gamma"]),
    )
    validate_mdp(mdp)
    stored = data.get("fingerprint")
    actual = mdp_fingerprint(mdp)
    if stored is not None and str(stored) != actual:
        raise ValueError(f"MDP document fingerprint {stored} does not match its tensors ({actual})")
    return mdp


def save_mdp(mdp: TabularMdp, path: str | Path) -> str:
    """Write an MDP document atomically.

    Returns:
        The MDP fingerprint.
    """
    path = Path(path)
    text = yaml.dump(
        mdp_to_dict(mdp), Dumper=_MdpDumper, sort_keys=False, default_flow_style=None, width=100
    )
    atomic_write_text(path, text)

    fingerprint = mdp_fingerprint(mdp)
    logger.info(f"Wrote MDP {fingerprint} to {path}")
    return fingerprint


def load_mdp(path: str | Path) -> TabularMdp:
    """Load and validate an MDP document.

    Raises:
        FileNotFoundError: If the file doesn't exist.
        ValueError: If the document is malformed or the MDP invalid.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"MDP file not found: {path}")

    with open(path) as f:
        data = yaml.load(f, Loader=_Loader)
    if not isinstance(data, dict):
        raise ValueError(f"MDP file {path} does not contain a mapping")

    mdp = mdp_from_dict(data)
    logger.debug(f"Loaded MDP {mdp_fingerprint(mdp)} from {path}")
    return mdp
