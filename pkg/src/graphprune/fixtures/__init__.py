"""Bundled model fixtures."""

from __future__ import annotations

from importlib import resources

NAMES = ("demonet_s", "chain_net", "diamond_net", "stacked_unets_mini")


def fixture_text(name: str) -> str:
    if name not in NAMES:
        raise KeyError(f"unknown fixture {name!r}; choose from {', '.join(NAMES)}")
    return resources.files(__name__).joinpath(f"{name}.json").read_text()


def load_fixture(name: str):
    from ..modelio import parse_model_spec
    return parse_model_spec(fixture_text(name))[0]
