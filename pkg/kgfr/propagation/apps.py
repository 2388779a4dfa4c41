from django.apps import AppConfig


class PropagationConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'kgfr.propagation'
    verbose_name = '渐进传播引擎'
