from django.apps import AppConfig


class EvaluationConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'kgfr.evaluation'
    verbose_name = '命令行与评测'
