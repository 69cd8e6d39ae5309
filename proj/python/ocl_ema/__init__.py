"""Online continual learning with EMA and weighted temporal-ensemble evaluation models."""

import json

from ._core import *  # noqa: F401,F403
from ._core import run_experiment_json


def run_experiment(config_text):
    """Run an INI experiment config and return the summary as a dict."""
    return json.loads(run_experiment_json(config_text))
