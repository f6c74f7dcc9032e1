"""
URL configuration for trl3d_lab project.

Only the admin is served; experiments run from management commands or Celery.
"""
from django.contrib import admin
from django.urls import path

urlpatterns = [
    path('admin/', admin.site.urls),
]
