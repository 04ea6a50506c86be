import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'stacked_ddd.settings')
django.setup()
