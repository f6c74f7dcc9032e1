"""
WSGI config for trl3d_lab project (serves the admin for browsing experiment runs).
"""

import os

from django.core.wsgi import get_wsgi_application

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'trl3d_lab.settings')

application = get_wsgi_application()
