"""
URL configuration for kgfr project.

Only the admin site is exposed; it lists persisted reasoning sessions.
"""
from django.contrib import admin
from django.urls import path

urlpatterns = [
    path('admin/', admin.site.urls),
]
