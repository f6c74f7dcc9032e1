# Generated by Django 4.2.7 on 2026-10-17 09:12

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('command', models.CharField(choices=[('gen_data', 'Generate data'), ('train_classify', 'Train classifier'), ('train_align', 'Train aligner'), ('eval_align', 'Evaluate alignment'), ('eval_depth', 'Evaluate depth'), ('eval_camera', 'Evaluate cameras'), ('gradcheck', 'Gradient check'), ('ablate', 'Ablation sweep')], max_length=32)),
                ('status', models.CharField(choices=[('RUNNING', 'Running'), ('SUCCEEDED', 'Succeeded'), ('FAILED', 'Failed')], default='RUNNING', max_length=16)),
                ('seed', models.DecimalField(decimal_places=0, default=0, max_digits=20)),
                ('run_dir', models.CharField(blank=True, max_length=1024)),
                ('config', models.JSONField(default=dict)),
                ('summary', models.JSONField(blank=True, default=dict)),
                ('failure_reason', models.TextField(blank=True)),
                ('library_version', models.CharField(max_length=32)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'db_table': 'experiment_runs',
                'ordering': ['-created_at', '-id'],
            },
        ),
    ]
