from django.apps import AppConfig


class ElastographyConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'elastography'
