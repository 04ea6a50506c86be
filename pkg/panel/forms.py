import json

from django import forms
from django.core.exceptions import ValidationError

from stacked_ddd.exceptions import ConfigError

from .datasets import DEFAULT_SCHEMA


class SchemaConfigForm(forms.Form):
    """Column-name map for load_panel, as read from a schema JSON file."""

    unit = forms.CharField(required=False, max_length=200, help_text='Column holding the unit id.')
    time = forms.CharField(required=False, max_length=200, help_text='Column holding the integer period.')
    outcome = forms.CharField(required=False, max_length=200, help_text='Column holding the outcome.')
    cohort = forms.CharField(required=False, max_length=200, help_text='Column holding the treatment-enabling period.')
    eligible = forms.CharField(required=False, max_length=200, help_text='Column holding the 0/1 eligibility flag.')
    never_token = forms.CharField(
        required=False,
        strip=False,
        max_length=50,
        help_text='Cohort token meaning never treated (default: empty string or "never").',
    )
    delimiter = forms.CharField(required=False, strip=False, max_length=1)

    def _column(self, key):
        value = (self.cleaned_data.get(key) or '').strip()
        return value or DEFAULT_SCHEMA[key]

    def clean_unit(self):
        return self._column('unit')

    def clean_time(self):
        return self._column('time')

    def clean_outcome(self):
        return self._column('outcome')

    def clean_cohort(self):
        return self._column('cohort')

    def clean_eligible(self):
        return self._column('eligible')

    def clean_never_token(self):
        """Keep None when absent so the loader falls back to its default tokens."""
        if 'never_token' not in self.data:
            return None
        return self.cleaned_data.get('never_token', '')

    def clean(self):
        cleaned = super().clean()
        names = [cleaned.get(key) for key in DEFAULT_SCHEMA]
        if None not in names and len(set(names)) != len(names):
            raise ValidationError('Each logical column must map to a distinct header name.')
        return cleaned

    def schema(self):
        return {key: self.cleaned_data[key] for key in DEFAULT_SCHEMA}


def load_schema_config(path=None):
    """
    Read and validate a schema JSON file.

    Returns:
        (schema dict, never_token or None, delimiter or None)
    """
    data = {}
    if path:
        with open(path, encoding='utf-8') as handle:
            try:
                data = json.load(handle)
            except json.JSONDecodeError as exc:
                raise ConfigError(f'schema file {path} is not valid JSON: {exc}') from exc
        if not isinstance(data, dict):
            raise ConfigError(f'schema file {path} must contain a JSON object')
    form = SchemaConfigForm(data=data)
    if not form.is_valid():
        raise ConfigError(f'invalid schema: {form.errors.as_text()}')
    return form.schema(), form.cleaned_data['never_token'], form.cleaned_data['delimiter'] or None
