import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'srproject.settings')
django.setup()
