from django.apps import AppConfig


class Trl3dConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'trl3d'
    verbose_name = 'trl3d experiments'
