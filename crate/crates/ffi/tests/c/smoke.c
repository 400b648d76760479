#include <math.h>
#include <stdio.h>
#include <string.h>

#include "pareidolia.h"

#define CHECK(cond)                                                  \
  do {                                                               \
    if (!(cond)) {                                                   \
      const char *m = pp_last_error_message();                       \
      fprintf(stderr, "line %d: %s (%s)\n", __LINE__, #cond,         \
              m ? m : "no message");                                 \
      return 1;                                                      \
    }                                                                \
  } while (0)

int main(int argc, char **argv) {
  if (argc != 2) return 2;

  double a[] = {1, 2, 3, 4}, b[] = {2, 2, 2, 2};
  PpStatResult r;
  CHECK(pp_one_sample_t(a, 4, 2.0, &r) == PP_STATUS_OK);
  CHECK(r.df == 3.0);
  CHECK(pp_pearson_r(a, b, 4, &r.t) == PP_STATUS_UNDEFINED);
  CHECK(pp_last_error_message() != NULL);
  CHECK(pp_welch_t(NULL, 4, b, 4, &r) == PP_STATUS_NULL_POINTER);

  double x[7], y[7];
  for (int k = 0; k < 7; k++) {
    x[k] = (2.0 * k + 1.0) / 14.0;
    y[k] = pp_sigmoid(5.0, 0.5, x[k]);
  }
  PpSigmoidFit fit;
  CHECK(pp_fit_sigmoid(x, y, 7, &fit) == PP_STATUS_OK);
  CHECK(!fit.flat && fabs(fit.a - 5.0) < 1e-6 && fabs(fit.b - 0.5) < 1e-6);

  PpBackbone *bb = NULL;
  CHECK(pp_backbone_load("/nonexistent/model.onnx", &bb) == PP_STATUS_IO);
  CHECK(pp_backbone_load(argv[1], &bb) == PP_STATUS_OK);
  size_t d = 0;
  CHECK(pp_backbone_feature_dim(bb, &d) == PP_STATUS_OK && d == 12);
  char hash[33];
  CHECK(pp_backbone_model_hash(bb, hash, 8) == PP_STATUS_BUFFER_TOO_SMALL);
  CHECK(pp_backbone_model_hash(bb, hash, sizeof hash) == PP_STATUS_OK && strlen(hash) == 32);

  size_t n = pp_image_len();
  static float pixels[3 * 224 * 224];
  for (size_t i = 0; i < n; i++) pixels[i] = 0.5f;
  float features[12];
  CHECK(pp_backbone_extract(bb, pixels, 1, features) == PP_STATUS_OK);
  for (int j = 0; j < 12; j++) CHECK(features[j] == 0.5f);
  pp_backbone_free(bb);

  double w[24] = {0}, bias[2] = {0.0, 0.0};
  w[0] = 1.0;
  PpHead *head = NULL;
  CHECK(pp_head_new(12, w, bias, &head) == PP_STATUS_OK);
  double p[2];
  CHECK(pp_head_predict_proba(head, features, 12, p) == PP_STATUS_OK);
  CHECK(fabs(p[0] - 1.0 / (1.0 + exp(-0.5))) < 1e-12 && fabs(p[0] + p[1] - 1.0) < 1e-12);
  CHECK(pp_head_predict_proba(head, features, 11, p) == PP_STATUS_INVALID_ARGUMENT);
  pp_head_free(head);

  printf("ok\n");
  return 0;
}
