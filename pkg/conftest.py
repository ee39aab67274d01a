# pytest wiring: configure django the same way manage.py does so the django test cases can run under pytest
import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'clpm.settings')
django.setup()
