from django.db import models
from django.utils import timezone


class ReasoningSession(models.Model):
    """一道问题的完整推理会话"""
    STATUS_CHOICES = [
        ('running', '进行中'),
        ('confirmed', '已确认'),
        ('exhausted', '已用尽步数'),
    ]

    qid = models.CharField(max_length=100, blank=True, verbose_name='问题编号')
    question = models.TextField(verbose_name='问题')
    topics = models.JSONField(default=list, verbose_name='主题实体')
    gold_answers = models.JSONField(default=list, blank=True, verbose_name='标准答案')
    predicted_answers = models.JSONField(default=list, blank=True, verbose_name='预测答案')
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='running', verbose_name='状态')
    steps = models.IntegerField(default=0, verbose_name='推理步数')
    llm_calls = models.IntegerField(default=0, verbose_name='LLM调用次数')
    tokens = models.IntegerField(default=0, verbose_name='使用的令牌数')
    retrieval_seconds = models.FloatField(default=0, verbose_name='检索时间(秒)')
    total_seconds = models.FloatField(default=0, verbose_name='总时间(秒)')
    created_at = models.DateTimeField(default=timezone.now, verbose_name='创建时间')

    class Meta:
        verbose_name = '推理会话'
        verbose_name_plural = '推理会话'
        ordering = ['-created_at']
        indexes = [
            models.Index(fields=['status']),
            models.Index(fields=['created_at']),
        ]

    def __str__(self):
        return f'{self.qid or self.pk} - {self.get_status_display()}'


class ReasoningTurn(models.Model):
    """会话中的一次 LLM 调用"""
    KIND_CHOICES = [
        ('answer', '作答'),
        ('answer-retry', '重新作答'),
        ('reflect', '反思'),
    ]

    session = models.ForeignKey(ReasoningSession, on_delete=models.CASCADE, related_name='turns', verbose_name='会话')
    ordinal = models.IntegerField(verbose_name='序号')
    step = models.IntegerField(default=0, verbose_name='推理步')
    kind = models.CharField(max_length=20, choices=KIND_CHOICES, verbose_name='类型')
    prompt = models.TextField(verbose_name='提示词')
    reply = models.TextField(blank=True, verbose_name='回复')

    class Meta:
        verbose_name = '对话轮次'
        verbose_name_plural = '对话轮次'
        ordering = ['session', 'ordinal']
        unique_together = ['session', 'ordinal']

    def __str__(self):
        return f'{self.session_id} #{self.ordinal} {self.get_kind_display()}'
