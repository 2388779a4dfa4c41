from django.apps import AppConfig


class ReasoningConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'kgfr.reasoning'
    verbose_name = 'LLM协同推理'
