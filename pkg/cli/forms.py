import json
import os

from django import forms
from django.core.exceptions import ValidationError

from diagnostics.demeaning import SpecKind
from estimators.aggregation import WeightScheme
from inference.bootstrap import MULTIPLIERS
from panel.forms import load_schema_config
from stacks.builders import ComparisonRule
from stacked_ddd.conf import ddd_setting
from stacked_ddd.exceptions import ConfigError, DDDError

# Flags whose names differ from the form fields
FLAG_ALIASES = {'bootstrap-B': 'bootstrap_B', 'format': 'formats'}


class RunConfigForm(forms.Form):
    """Resolved configuration of one command run.

    Values missing from both the flags and the --config file fall back to
    settings.STACKED_DDD.
    """

    input = forms.CharField(required=False)
    schema = forms.CharField(required=False)
    L = forms.IntegerField(required=False, min_value=1)
    K = forms.IntegerField(required=False, min_value=0)
    rule = forms.CharField(required=False)
    weights = forms.CharField(required=False)
    alpha = forms.FloatField(required=False)
    bootstrap_B = forms.IntegerField(required=False, min_value=0)
    multiplier = forms.ChoiceField(required=False, choices=[(m, m) for m in MULTIPLIERS])
    seed = forms.IntegerField(required=False, min_value=0)
    n_jobs = forms.IntegerField(required=False)
    on_infeasible = forms.ChoiceField(required=False, choices=[('skip', 'skip'), ('error', 'error')])
    spec = forms.CharField(required=False)
    out = forms.CharField(required=False)
    formats = forms.CharField(required=False)

    def clean_L(self):
        value = self.cleaned_data.get('L')
        return ddd_setting('WINDOW_L') if value is None else value

    def clean_K(self):
        value = self.cleaned_data.get('K')
        return ddd_setting('WINDOW_K') if value is None else value

    def clean_rule(self):
        value = self.cleaned_data.get('rule') or ddd_setting('COMPARISON_RULE')
        try:
            return str(ComparisonRule.parse(value))
        except DDDError as exc:
            raise ValidationError(str(exc)) from exc

    def clean_weights(self):
        value = self.cleaned_data.get('weights') or ddd_setting('WEIGHT_SCHEME')
        if str(value).startswith('custom:') and not os.path.exists(value.split(':', 1)[1]):
            raise FileNotFoundError(f'custom weight file not found: {value.split(":", 1)[1]}')
        try:
            WeightScheme.parse(value)
        except DDDError as exc:
            raise ValidationError(str(exc)) from exc
        return value

    def clean_alpha(self):
        value = self.cleaned_data.get('alpha')
        value = ddd_setting('ALPHA') if value is None else value
        if not 0 < value < 1:
            raise ValidationError(f'alpha must lie in (0, 1), got {value}.')
        return value

    def clean_bootstrap_B(self):
        value = self.cleaned_data.get('bootstrap_B')
        return ddd_setting('BOOTSTRAP_B') if value is None else value

    def clean_multiplier(self):
        return self.cleaned_data.get('multiplier') or ddd_setting('MULTIPLIER')

    def clean_seed(self):
        value = self.cleaned_data.get('seed')
        return ddd_setting('SEED') if value is None else value

    def clean_n_jobs(self):
        value = self.cleaned_data.get('n_jobs')
        return ddd_setting('N_JOBS') if value is None else value

    def clean_on_infeasible(self):
        return self.cleaned_data.get('on_infeasible') or ddd_setting('ON_INFEASIBLE')

    def clean_spec(self):
        value = self.cleaned_data.get('spec') or SpecKind.HW_STYLE.value
        try:
            return SpecKind.parse(value).value
        except DDDError as exc:
            raise ValidationError(str(exc)) from exc

    def clean_out(self):
        return self.cleaned_data.get('out') or '.'

    def clean_formats(self):
        value = self.cleaned_data.get('formats') or ','.join(ddd_setting('OUTPUT_FORMATS'))
        formats = [item.strip().lower() for item in value.split(',') if item.strip()]
        unknown = [item for item in formats if item not in ('json', 'csv')]
        if unknown:
            raise ValidationError(f'Unknown output format(s): {", ".join(unknown)}. Use json and/or csv.')
        return formats

    def resolved(self):
        """JSON-ready echo of the run configuration, schema included."""
        data = dict(self.cleaned_data)
        schema, never_token, delimiter = load_schema_config(data.get('schema') or None)
        data['schema_columns'] = schema
        data['never_token'] = never_token
        data['delimiter'] = delimiter
        return data


def read_config_file(path):
    """Options from a --config JSON file (for example an earlier resolved_config.json)."""
    if not path:
        return {}
    with open(path, encoding='utf-8') as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigError(f'config file {path} is not valid JSON: {exc}') from exc
    if not isinstance(data, dict):
        raise ConfigError(f'config file {path} must contain a JSON object')
    return {FLAG_ALIASES.get(key, key): value for key, value in data.items()}


def build_run_config(options, config_path=None):
    """
    Merge --config file values with explicit flags (flags win) and validate.

    Raises:
        ValidationError when a field is invalid
    """
    data = read_config_file(config_path)
    data = {key: value for key, value in data.items() if key in RunConfigForm.base_fields}
    if isinstance(data.get('formats'), list):
        data['formats'] = ','.join(data['formats'])
    for key in RunConfigForm.base_fields:
        value = options.get(key)
        if value is not None:
            data[key] = value
    form = RunConfigForm(data={key: value for key, value in data.items() if value is not None})
    if not form.is_valid():
        raise ValidationError(form.errors.as_text())
    return form
