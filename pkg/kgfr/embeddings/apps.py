from django.apps import AppConfig


class EmbeddingsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'kgfr.embeddings'
    verbose_name = '文本嵌入'
