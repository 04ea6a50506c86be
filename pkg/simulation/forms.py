import json

from django import forms
from django.core.exceptions import ValidationError

from stacked_ddd.exceptions import ConfigError

from .dgp import DgpConfig


class DgpConfigForm(forms.Form):
    """Validated DGP settings, as read from a JSON config file."""

    cohorts = forms.JSONField(help_text='List of [g, share] pairs.')
    never_share = forms.FloatField(required=False, min_value=0.0, max_value=1.0)
    eligible_share = forms.JSONField(required=False, help_text='Number, or map of cohort key to share.')
    group_trend = forms.JSONField(required=False)
    eligibility_trend = forms.JSONField(required=False)
    violation = forms.JSONField(required=False, help_text='{"cohort": g, "gamma": value}')
    catt = forms.JSONField(required=False)
    noise_sd = forms.FloatField(required=False, min_value=0.0)
    n_units = forms.IntegerField(required=False, min_value=1)
    T = forms.IntegerField(required=False, min_value=2)
    seed = forms.IntegerField(required=False, min_value=0)

    def clean_cohorts(self):
        cohorts = self.cleaned_data['cohorts']
        if not isinstance(cohorts, list) or not cohorts:
            raise ValidationError('cohorts must be a non-empty list of [g, share] pairs.')
        for item in cohorts:
            if not isinstance(item, (list, tuple)) or len(item) != 2:
                raise ValidationError(f'Invalid cohort entry {item!r}; expected [g, share].')
        return cohorts

    def clean(self):
        cleaned = super().clean()
        if self.errors:
            return cleaned
        data = {key: value for key, value in cleaned.items() if value not in (None, '')}
        try:
            self.config = DgpConfig.from_dict(data)
        except ConfigError as exc:
            raise ValidationError(str(exc)) from exc
        return cleaned


def load_dgp_config(path=None, data=None, seed=None):
    """Read a DGP JSON file (or a dict) and return a validated DgpConfig."""
    if path:
        with open(path, encoding='utf-8') as handle:
            try:
                data = json.load(handle)
            except json.JSONDecodeError as exc:
                raise ConfigError(f'DGP config {path} is not valid JSON: {exc}') from exc
    if not isinstance(data, dict):
        raise ConfigError('DGP config must be a JSON object')
    if seed is not None:
        data = {**data, 'seed': seed}
    form = DgpConfigForm(data={
        key: json.dumps(value) if key in ('cohorts', 'eligible_share', 'group_trend', 'eligibility_trend', 'violation', 'catt') else value
        for key, value in data.items()
    })
    if not form.is_valid():
        raise ConfigError(f'invalid DGP config: {form.errors.as_text()}')
    return form.config
