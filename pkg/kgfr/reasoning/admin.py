from django.contrib import admin
from .models import ReasoningSession, ReasoningTurn


class ReasoningTurnInline(admin.TabularInline):
    model = ReasoningTurn
    extra = 0
    readonly_fields = ['ordinal', 'step', 'kind', 'prompt', 'reply']


@admin.register(ReasoningSession)
class ReasoningSessionAdmin(admin.ModelAdmin):
    list_display = ['qid', 'question', 'status', 'steps', 'llm_calls', 'tokens', 'created_at']
    list_filter = ['status', 'created_at']
    search_fields = ['qid', 'question']
    readonly_fields = ['created_at']
    inlines = [ReasoningTurnInline]


@admin.register(ReasoningTurn)
class ReasoningTurnAdmin(admin.ModelAdmin):
    list_display = ['session', 'ordinal', 'step', 'kind']
    list_filter = ['kind']
    search_fields = ['prompt', 'reply']
