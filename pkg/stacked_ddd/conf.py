from django.conf import settings

DEFAULTS = {
    'WINDOW_L': 2,
    'WINDOW_K': 2,
    'COMPARISON_RULE': 'never',
    'WEIGHT_SCHEME': 'fwl',
    'ON_INFEASIBLE': 'skip',
    'ALPHA': 0.05,
    'BOOTSTRAP_B': 999,
    'MULTIPLIER': 'rademacher',
    'SEED': 20240101,
    'N_JOBS': 1,
    'NEVER_TOKENS': ('', 'never'),
    'DELIMITER': ',',
    'DEMEAN_TOLERANCE': 1e-12,
    'DEMEAN_MAX_ITER': 10000,
    'WEIGHT_TOLERANCE': 1e-10,
    'RANK_TOLERANCE': 1e-10,
    'CRVE_DF_CORRECTION': False,
    'OUTPUT_FORMATS': ('json', 'csv'),
}


def ddd_setting(name):
    """Look up an estimation default, honoring settings.STACKED_DDD overrides."""
    overrides = getattr(settings, 'STACKED_DDD', {})
    if name in overrides:
        return overrides[name]
    return DEFAULTS[name]
