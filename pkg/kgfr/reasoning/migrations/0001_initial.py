import django.db.models.deletion
import django.utils.timezone
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ReasoningSession',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('qid', models.CharField(blank=True, max_length=100, verbose_name='问题编号')),
                ('question', models.TextField(verbose_name='问题')),
                ('topics', models.JSONField(default=list, verbose_name='主题实体')),
                ('gold_answers', models.JSONField(blank=True, default=list, verbose_name='标准答案')),
                ('predicted_answers', models.JSONField(blank=True, default=list, verbose_name='预测答案')),
                ('status', models.CharField(choices=[('running', '进行中'), ('confirmed', '已确认'), ('exhausted', '已用尽步数')], default='running', max_length=20, verbose_name='状态')),
                ('steps', models.IntegerField(default=0, verbose_name='推理步数')),
                ('llm_calls', models.IntegerField(default=0, verbose_name='LLM调用次数')),
                ('tokens', models.IntegerField(default=0, verbose_name='使用的令牌数')),
                ('retrieval_seconds', models.FloatField(default=0, verbose_name='检索时间(秒)')),
                ('total_seconds', models.FloatField(default=0, verbose_name='总时间(秒)')),
                ('created_at', models.DateTimeField(default=django.utils.timezone.now, verbose_name='创建时间')),
            ],
            options={
                'verbose_name': '推理会话',
                'verbose_name_plural': '推理会话',
                'ordering': ['-created_at'],
                'indexes': [models.Index(fields=['status'], name='reasoning_r_status_8c1f2a_idx'), models.Index(fields=['created_at'], name='reasoning_r_created_3d9e4b_idx')],
            },
        ),
        migrations.CreateModel(
            name='ReasoningTurn',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('ordinal', models.IntegerField(verbose_name='序号')),
                ('step', models.IntegerField(default=0, verbose_name='推理步')),
                ('kind', models.CharField(choices=[('answer', '作答'), ('answer-retry', '重新作答'), ('reflect', '反思')], max_length=20, verbose_name='类型')),
                ('prompt', models.TextField(verbose_name='提示词')),
                ('reply', models.TextField(blank=True, verbose_name='回复')),
                ('session', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='turns', to='reasoning.reasoningsession', verbose_name='会话')),
            ],
            options={
                'verbose_name': '对话轮次',
                'verbose_name_plural': '对话轮次',
                'ordering': ['session', 'ordinal'],
                'unique_together': {('session', 'ordinal')},
            },
        ),
    ]
