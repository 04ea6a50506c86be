"""
Export helpers for command outputs: JSON documents and tidy CSV tables.
"""
import json
import logging
import math
import os

import numpy as np
from django.core.serializers.json import DjangoJSONEncoder

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = 'resolved_config.json'


class ResultEncoder(DjangoJSONEncoder):
    """DjangoJSONEncoder that also understands numpy scalars and arrays."""

    def default(self, o):
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, np.bool_):
            return bool(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (set, frozenset)):
            return sorted(o)
        return super().default(o)


def _clean(value):
    """Replace non-finite floats with None so the output stays valid JSON."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (float, np.floating)) and not math.isfinite(value):
        return None
    return value


def dumps(payload):
    return json.dumps(_clean(payload), cls=ResultEncoder, indent=2, sort_keys=True)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def write_json(out_dir, name, payload):
    path = os.path.join(ensure_dir(out_dir), f'{name}.json')
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(dumps(payload))
        handle.write('\n')
    logger.info(f'Wrote {path}')
    return path


def write_csv(out_dir, name, frame):
    path = os.path.join(ensure_dir(out_dir), f'{name}.csv')
    frame.to_csv(path, index=False, float_format=None)
    logger.info(f'Wrote {path}')
    return path


def write_outputs(out_dir, name, formats, payload=None, frame=None):
    """Write name.json and/or name.csv per the requested formats; returns the paths written."""
    paths = []
    if 'json' in formats and payload is not None:
        paths.append(write_json(out_dir, name, payload))
    if 'csv' in formats and frame is not None:
        paths.append(write_csv(out_dir, name, frame))
    return paths


def write_resolved_config(out_dir, config):
    return write_json(out_dir, RESOLVED_CONFIG[:-len('.json')], config)
