from django.apps import AppConfig


class SuperresConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'superres'
    verbose_name = 'One-step super-resolution'

    def ready(self):
        # Thread count is a process-wide torch setting; apply it once at startup.
        import torch
        from django.conf import settings

        torch.set_num_threads(settings.SUPERRES_NUM_THREADS)
