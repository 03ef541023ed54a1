#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "chopt.h"

static char *slurp(const char *path) {
  FILE *f = fopen(path, "rb");
  if (!f) return NULL;
  fseek(f, 0, SEEK_END);
  long n = ftell(f);
  fseek(f, 0, SEEK_SET);
  char *buf = malloc((size_t)n + 1);
  if (fread(buf, 1, (size_t)n, f) != (size_t)n) {
    fclose(f);
    free(buf);
    return NULL;
  }
  buf[n] = '\0';
  fclose(f);
  return buf;
}

#define CHECK(call)                                                   \
  do {                                                                \
    ChoptStatus st_ = (call);                                         \
    if (st_ != CHOPT_STATUS_OK) {                                     \
      const char *msg_ = chopt_last_error();                          \
      fprintf(stderr, "%s -> %d: %s\n", #call, (int)st_, msg_ ? msg_ : ""); \
      return 1;                                                       \
    }                                                                 \
  } while (0)

int main(int argc, char **argv) {
  if (argc < 2) return 2;
  char *config = slurp(argv[1]);
  if (!config) return 2;

  ChoptEngine *engine = NULL;
  CHECK(chopt_engine_new("{\"cluster\": {\"capacity\": 20}}", &engine));
  uint32_t id = 0;
  CHECK(chopt_engine_submit(engine, config, &id));
  CHECK(chopt_engine_run_until_idle(engine, 100000, NULL));

  char *csv = NULL;
  CHECK(chopt_engine_export(engine, id, "csv", &csv));
  int rows = -1;
  for (const char *p = csv; *p; p++) rows += *p == '\n';
  chopt_string_free(csv);

  if (chopt_engine_stop(engine, 42) != CHOPT_STATUS_NOT_FOUND) return 1;

  chopt_engine_free(engine);
  free(config);
  printf("ok %d\n", rows);
  return 0;
}
