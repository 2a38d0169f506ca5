#!/usr/bin/env python3
"""
Script to train every variant on the default config and compare them
"""

import sys
import os
import logging
from pathlib import Path

# Add the project root to the Python path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.config import settings
from ml.agents import Variant
from ml.cli import configure_logging
from ml.harness import compare_table, load_config, train

logger = logging.getLogger("scripts.train_models")

def main():
    """Train all variants, then write the comparison table"""
    configure_logging(settings.LOG_LEVEL)
    config_path = settings.DEFAULT_CONFIG_PATH
    if not os.path.exists(config_path):
        logger.error("config not found at %s", config_path)
        return 1

    base = load_config(config_path)
    logs = {}
    for variant in Variant:
        cfg = base.for_variant(variant)
        logger.info("training %s on seeds %s", variant.value, cfg.seeds)
        logs[variant.value] = list(train(cfg).values())

    table = compare_table(logs, tail=base.window)
    out = Path(base.output_dir) / "compare.csv"
    table.to_csv(out, index=False, lineterminator="\n")
    logger.info("comparison written to %s", out)
    print(table.to_string(index=False))
    return 0

if __name__ == "__main__":
    sys.exit(main())
