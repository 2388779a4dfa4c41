from django.apps import AppConfig


class GraphStoreConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'kgfr.graph_store'
    verbose_name = '知识图谱存储'
